//! Strategy replay over the test split with impact-adjusted P&L, attribution,
//! and classification diagnostics.
//!
//! Quantities are signed (`q > 0` INC, `q < 0` DEC) and a trade's `r` is the
//! edge of a long position, `-DART`, so `pnl = q (r - impact)` for both sides.

mod metrics;
mod report;

pub use metrics::{
    bucket_significance, classification_metrics, histogram, js_divergence, spike_alignment,
    Alignment, Axis, BucketKey, BucketStat, ClassificationRow, Confusion,
};
pub use report::{emit_report, metrics_csv, REPORT_FILES};

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Datelike, FixedOffset, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::bidstack::ImpactParams;
use crate::calendar::MarketCalendar;
use crate::classifier::{predict, Side, SpikeModel};
use crate::error::{Error, Result};
use crate::features::LabeledObservation;
use crate::sizing::{
    objective_raw, optimize, optimize_clipped, ExpectedPayoffs, PayoffTable, Regime, TradePlan,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Execution,
    Prediction,
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            View::Execution => "execution",
            View::Prediction => "prediction",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeRecord {
    pub timestamp: DateTime<FixedOffset>,
    pub zone: String,
    /// Signed MWh.
    pub q: f64,
    pub side: Side,
    /// Realized edge of a long position, `-DART`.
    pub r: f64,
    /// Per-MWh impact `k_E(S) S + k_z q`.
    pub impact_cost: f64,
    pub pnl: f64,
    /// Net position of the hour's plan.
    pub net_position: f64,
}

impl TradeRecord {
    fn new(
        timestamp: DateTime<FixedOffset>,
        zone: &str,
        q: f64,
        dart: f64,
        impact_cost: f64,
        s: f64,
    ) -> Self {
        let r = -dart;
        TradeRecord {
            timestamp,
            zone: zone.to_string(),
            q,
            side: if q >= 0.0 { Side::Inc } else { Side::Dec },
            r,
            impact_cost,
            pnl: q * (r - impact_cost),
            net_position: s,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Unconstrained,
    Clipped,
    Restricted,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Unconstrained => "unconstrained",
            Mode::Clipped => "clipped",
            Mode::Restricted => "restricted",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unconstrained" => Ok(Mode::Unconstrained),
            "clipped" => Ok(Mode::Clipped),
            "restricted" => Ok(Mode::Restricted),
            _ => Err(Error::Config(vec![format!("unknown mode {s:?}")])),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sizing {
    /// Quantities from the impact-aware optimizer.
    #[default]
    Optimized,
    /// One MWh in each signal's direction; impact still applies.
    Unit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyOptions {
    pub mode: Mode,
    pub sizing: Sizing,
    /// Admissible (zone, side, bucket) cells for restricted mode.
    pub admissible: BTreeSet<BucketKey>,
    pub inc_top_fraction: f64,
    pub dec_top_fraction: f64,
}

impl Default for StrategyOptions {
    fn default() -> Self {
        StrategyOptions {
            mode: Mode::Unconstrained,
            sizing: Sizing::Optimized,
            admissible: BTreeSet::new(),
            inc_top_fraction: 0.2,
            dec_top_fraction: 0.05,
        }
    }
}

impl StrategyOptions {
    pub fn top_fraction(&self, side: Side) -> f64 {
        match side {
            Side::Inc => self.inc_top_fraction,
            Side::Dec => self.dec_top_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideAlignment {
    pub side: Side,
    pub alignment: Alignment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneAttribution {
    pub zone: String,
    pub hours_active: usize,
    pub mean_abs_q: f64,
    pub pnl: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub timestamp: DateTime<FixedOffset>,
    pub total: f64,
    pub inc: f64,
    pub dec: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub execution: Vec<TradeRecord>,
    pub prediction: Vec<TradeRecord>,
    pub plans: Vec<(DateTime<FixedOffset>, TradePlan)>,
    pub classification: Vec<ClassificationRow>,
    pub alignment: Vec<SideAlignment>,
    pub significance: Vec<BucketStat>,
    /// Zone-hours replayed.
    pub observations: usize,
}

impl BacktestReport {
    pub fn trades(&self, view: View) -> &[TradeRecord] {
        match view {
            View::Execution => &self.execution,
            View::Prediction => &self.prediction,
        }
    }

    pub fn total_pnl(&self, view: View) -> f64 {
        self.trades(view).iter().map(|t| t.pnl).sum()
    }

    pub fn side_pnl(&self, view: View, side: Side) -> f64 {
        self.trades(view)
            .iter()
            .filter(|t| t.side == side)
            .map(|t| t.pnl)
            .sum()
    }

    /// Zones sorted by name.
    pub fn zone_attribution(&self, view: View) -> Vec<ZoneAttribution> {
        let mut m: BTreeMap<&str, (BTreeSet<i64>, f64, usize, f64)> = BTreeMap::new();
        for t in self.trades(view) {
            let e = m.entry(&t.zone).or_default();
            e.0.insert(t.timestamp.timestamp());
            e.1 += t.q.abs();
            e.2 += 1;
            e.3 += t.pnl;
        }
        m.into_iter()
            .map(|(z, (hours, abs_q, n, pnl))| ZoneAttribution {
                zone: z.to_string(),
                hours_active: hours.len(),
                mean_abs_q: abs_q / n as f64,
                pnl,
            })
            .collect()
    }

    /// P&L per market-local calendar year.
    pub fn yearly(&self, view: View) -> BTreeMap<i32, f64> {
        let mut m = BTreeMap::new();
        for t in self.trades(view) {
            *m.entry(t.timestamp.naive_local().year()).or_insert(0.0) += t.pnl;
        }
        m
    }

    /// Cumulative P&L after each traded hour.
    pub fn series(&self, view: View) -> Vec<SeriesPoint> {
        let mut by_hour: BTreeMap<i64, (DateTime<FixedOffset>, f64, f64)> = BTreeMap::new();
        for t in self.trades(view) {
            let e = by_hour
                .entry(t.timestamp.timestamp())
                .or_insert((t.timestamp, 0.0, 0.0));
            match t.side {
                Side::Inc => e.1 += t.pnl,
                Side::Dec => e.2 += t.pnl,
            }
        }
        let (mut inc, mut dec) = (0.0, 0.0);
        by_hour
            .into_values()
            .map(|(ts, i, d)| {
                inc += i;
                dec += d;
                SeriesPoint {
                    timestamp: ts,
                    total: inc + dec,
                    inc,
                    dec,
                }
            })
            .collect()
    }
}

fn check_disjoint(models: &[&SpikeModel], o: &LabeledObservation) -> Result<()> {
    for m in models {
        if let Some(r) = m.train_meta.train_range {
            if r.contains(o.timestamp.naive_local().date()) {
                return Err(Error::SplitOverlap(format!(
                    "test row {} of {} lies in the training range {r}",
                    o.timestamp.to_rfc3339(),
                    o.zone
                )));
            }
        }
    }
    Ok(())
}

fn models_by_zone<M: Borrow<SpikeModel>>(models: &[M]) -> BTreeMap<&str, Vec<&SpikeModel>> {
    let mut m: BTreeMap<&str, Vec<&SpikeModel>> = BTreeMap::new();
    for model in models {
        let model = model.borrow();
        m.entry(model.zone.as_str()).or_default().push(model);
    }
    m
}

fn classification<O: Borrow<LabeledObservation>>(
    by_zone: &BTreeMap<&str, Vec<&SpikeModel>>,
    observations: &[O],
    side: Option<Side>,
) -> Result<Vec<ClassificationRow>> {
    let mut cells: BTreeMap<(String, Side), ClassificationRow> = BTreeMap::new();
    for o in observations {
        let o = o.borrow();
        for m in by_zone.get(o.zone.as_str()).into_iter().flatten() {
            if side.is_some_and(|s| s != m.side) {
                continue;
            }
            let fired = predict(m, &o.x)? >= m.tau;
            let label = m.side.label_at(o.realized_dart, m.gamma) == 1;
            cells
                .entry((m.zone.clone(), m.side))
                .or_insert_with(|| ClassificationRow {
                    zone: m.zone.clone(),
                    side: m.side,
                    gamma: m.gamma,
                    tau: m.tau,
                    confusion: Confusion::default(),
                })
                .confusion
                .add(fired, label);
        }
    }
    Ok(cells.into_values().collect())
}

/// Per (zone, side) confusion counts of each model's signals against its own
/// threshold labels.
pub fn classify<M, O>(models: &[M], observations: &[O]) -> Result<Vec<ClassificationRow>>
where
    M: Borrow<SpikeModel>,
    O: Borrow<LabeledObservation>,
{
    classification(&models_by_zone(models), observations, None)
}

fn alignments<O: Borrow<LabeledObservation>>(
    prediction: &[TradeRecord],
    observations: &[O],
    opts: &StrategyOptions,
) -> Result<Vec<SideAlignment>> {
    let mut out = Vec::new();
    for side in Side::BOTH {
        let trades: Vec<NaiveDateTime> = prediction
            .iter()
            .filter(|t| t.side == side)
            .map(|t| t.timestamp.naive_local())
            .collect();
        if trades.is_empty() {
            continue;
        }
        let realized: Vec<(NaiveDateTime, f64)> = observations
            .iter()
            .map(|o| {
                let o = o.borrow();
                (o.timestamp.naive_local(), side.edge(o.realized_dart))
            })
            .collect();
        for axis in Axis::ALL {
            out.push(SideAlignment {
                side,
                alignment: spike_alignment(&trades, &realized, axis, opts.top_fraction(side))?,
            });
        }
    }
    Ok(out)
}

/// Unit-size, impact-free replay of one side: a 1 MWh trade whenever `p >= tau`.
pub fn run_benchmark<M, O>(models: &[M], observations: &[O], side: Side) -> Result<BacktestReport>
where
    M: Borrow<SpikeModel>,
    O: Borrow<LabeledObservation>,
{
    let by_zone = models_by_zone(models);
    let mut trades = Vec::new();
    for o in observations {
        let o = o.borrow();
        let Some(ms) = by_zone.get(o.zone.as_str()) else {
            continue;
        };
        check_disjoint(ms, o)?;
        for m in ms.iter().filter(|m| m.side == side) {
            if predict(m, &o.x)? >= m.tau {
                trades.push(TradeRecord::new(
                    o.timestamp,
                    &o.zone,
                    side.sign(),
                    o.realized_dart,
                    0.0,
                    side.sign(),
                ));
            }
        }
    }
    trades.sort_by(|a, b| {
        (a.timestamp.timestamp(), &a.zone).cmp(&(b.timestamp.timestamp(), &b.zone))
    });
    let opts = StrategyOptions::default();
    Ok(BacktestReport {
        alignment: alignments(&trades, observations, &opts)?,
        classification: classification(&by_zone, observations, Some(side))?,
        execution: trades.clone(),
        prediction: trades,
        plans: Vec::new(),
        significance: Vec::new(),
        observations: observations.len(),
    })
}

/// One zone's signal in an hour after side selection.
struct Signal<'a> {
    obs: &'a LabeledObservation,
    side: Side,
    x: f64,
}

/// Joint impact-aware replay. For every hour with at least one fired eligible
/// signal, picks per zone the fired side with the larger validation edge,
/// sizes jointly, and books execution-view and prediction-view trades.
pub fn run_strategy<M, O>(
    models: &[M],
    payoffs: &PayoffTable,
    params: &ImpactParams,
    observations: &[O],
    calendar: &MarketCalendar,
    opts: &StrategyOptions,
) -> Result<BacktestReport>
where
    M: Borrow<SpikeModel>,
    O: Borrow<LabeledObservation>,
{
    let by_zone = models_by_zone(models);
    if opts.sizing == Sizing::Optimized {
        let p = params.problems();
        if !p.is_empty() {
            return Err(Error::MissingCalibration(p.join("; ")));
        }
    }
    for (zone, ms) in &by_zone {
        if ms.iter().any(|m| payoffs.is_eligible(zone, m.side)) && params.kz(zone).is_err() {
            return Err(Error::MissingCalibration(format!("k_z for zone {zone}")));
        }
    }

    let mut hours: BTreeMap<i64, Vec<&LabeledObservation>> = BTreeMap::new();
    for o in observations {
        let o = o.borrow();
        if let Some(ms) = by_zone.get(o.zone.as_str()) {
            check_disjoint(ms, o)?;
        }
        hours.entry(o.timestamp.timestamp()).or_default().push(o);
    }

    let mut report = BacktestReport {
        observations: observations.len(),
        ..Default::default()
    };
    for rows in hours.values() {
        let ts = rows[0].timestamp;
        let bucket = calendar.bucket_of(&ts);
        let mut signals: BTreeMap<&str, Signal> = BTreeMap::new();
        for o in rows {
            for m in by_zone.get(o.zone.as_str()).into_iter().flatten() {
                if !payoffs.is_eligible(&m.zone, m.side) || predict(m, &o.x)? < m.tau {
                    continue;
                }
                let x = if opts.mode == Mode::Restricted {
                    let key = BucketKey {
                        zone: m.zone.clone(),
                        side: m.side,
                        bucket,
                    };
                    if !opts.admissible.contains(&key) {
                        continue;
                    }
                    payoffs.edge(&m.zone, m.side, Some(bucket))
                } else {
                    payoffs.edge(&m.zone, m.side, None)
                };
                let Some(x) = x.filter(|v| *v > 0.0) else {
                    continue;
                };
                let better = signals.get(o.zone.as_str()).is_none_or(|s| x > s.x);
                if better {
                    signals.insert(
                        &o.zone,
                        Signal {
                            obs: o,
                            side: m.side,
                            x,
                        },
                    );
                }
            }
        }
        if signals.is_empty() {
            continue;
        }

        let mut x = ExpectedPayoffs::default();
        for (z, s) in &signals {
            x.insert(z, s.side, s.x);
        }
        let k_e = params
            .k_e(bucket)
            .map_err(|_| Error::MissingCalibration(format!("k_E for bucket {bucket}")));
        let plan = match opts.sizing {
            Sizing::Optimized => {
                k_e?;
                match opts.mode {
                    Mode::Unconstrained => optimize(&x, params, bucket)?,
                    Mode::Clipped | Mode::Restricted => optimize_clipped(&x, params, bucket)?,
                }
            }
            Sizing::Unit => unit_plan(&x, params, k_e?)?,
        };
        let (kp, km) = params.k_e(bucket)?;
        let ke = if plan.s >= 0.0 { kp } else { km };
        for (z, &q) in &plan.q {
            if q == 0.0 {
                continue;
            }
            let sig = &signals[z.as_str()];
            let impact = ke * plan.s + params.kz(z)? * q;
            report.execution.push(TradeRecord::new(
                ts,
                z,
                q,
                sig.obs.realized_dart,
                impact,
                plan.s,
            ));
        }
        let unit_s: f64 = signals.values().map(|s| s.side.sign()).sum();
        for (z, sig) in &signals {
            report.prediction.push(TradeRecord::new(
                ts,
                z,
                sig.side.sign(),
                sig.obs.realized_dart,
                0.0,
                unit_s,
            ));
        }
        report.plans.push((ts, plan));
    }
    report.classification = classification(&by_zone, observations, None)?;
    report.alignment = alignments(&report.prediction, observations, opts)?;
    Ok(report)
}

fn unit_plan(
    x: &ExpectedPayoffs,
    params: &ImpactParams,
    (kp, km): (f64, f64),
) -> Result<TradePlan> {
    let q: BTreeMap<String, f64> = x
        .side_hint
        .iter()
        .map(|(z, s)| (z.clone(), s.sign()))
        .collect();
    let qs: Vec<f64> = q.values().copied().collect();
    let xs: Vec<f64> = q.keys().map(|z| x.x[z]).collect();
    let ks = q.keys().map(|z| params.kz(z)).collect::<Result<Vec<_>>>()?;
    let s: f64 = qs.iter().sum();
    Ok(TradePlan {
        objective: objective_raw(&qs, &xs, &ks, kp, km),
        regime: if s > 0.0 {
            Regime::NetBuy
        } else if s < 0.0 {
            Regime::NetSell
        } else {
            Regime::NetFlat
        },
        q,
        s,
    })
}

/// Unit-size per-trade validation P&L keyed by (zone, side, bucket), the input
/// of [`bucket_significance`].
pub fn bucket_trades<M, O>(
    models: &[M],
    observations: &[O],
    calendar: &MarketCalendar,
) -> Result<Vec<(BucketKey, f64)>>
where
    M: Borrow<SpikeModel>,
    O: Borrow<LabeledObservation>,
{
    let by_zone = models_by_zone(models);
    let mut out = Vec::new();
    for o in observations {
        let o = o.borrow();
        for m in by_zone.get(o.zone.as_str()).into_iter().flatten() {
            if predict(m, &o.x)? >= m.tau {
                out.push((
                    BucketKey {
                        zone: m.zone.clone(),
                        side: m.side,
                        bucket: calendar.bucket_of(&o.timestamp),
                    },
                    m.side.edge(o.realized_dart),
                ));
            }
        }
    }
    Ok(out)
}
