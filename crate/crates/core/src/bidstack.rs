//! Aggregate day-ahead bid stacks, clearing, and impact calibration.
//!
//! Curves are step functions of price:
//! `Q^S(p) = max { Q_i : p_i <= p }` and `Q^D(p) = max { Q_j : p_j >= p }`.
//! The clearing price is the infimum of prices with `Q^S(p) >= Q^D(p)`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, FixedOffset};
use serde::{Deserialize, Serialize};

use crate::calendar::{bucket_keys, Bucket, DateRange, MarketCalendar};
use crate::error::{Error, Result};
use crate::panel::Panel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BidStack {
    pub timestamp: DateTime<FixedOffset>,
    /// `(price, cumulative quantity)`, price ascending, quantity non-decreasing.
    supply: Vec<(f64, f64)>,
    /// `(price, cumulative quantity)`, price ascending, quantity non-increasing.
    demand: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClearingPoint {
    pub p_star: f64,
    pub q_star: f64,
}

impl BidStack {
    /// Validates and normalizes the curves (demand may be given in either price order).
    pub fn new(
        timestamp: DateTime<FixedOffset>,
        mut supply: Vec<(f64, f64)>,
        mut demand: Vec<(f64, f64)>,
    ) -> Result<Self> {
        let ts = timestamp.to_rfc3339();
        if supply.is_empty() || demand.is_empty() {
            return Err(Error::InvalidStack(format!(
                "{ts}: empty supply or demand curve"
            )));
        }
        if supply
            .iter()
            .chain(&demand)
            .any(|(p, q)| !p.is_finite() || !q.is_finite() || *q < 0.0)
        {
            return Err(Error::InvalidStack(format!(
                "{ts}: prices must be finite and quantities finite and non-negative"
            )));
        }
        supply.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        demand.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
        if supply.windows(2).any(|w| w[1].1 < w[0].1) {
            return Err(Error::InvalidStack(format!(
                "{ts}: supply quantity decreases with price"
            )));
        }
        if demand.windows(2).any(|w| w[1].1 > w[0].1) {
            return Err(Error::InvalidStack(format!(
                "{ts}: demand quantity increases with price"
            )));
        }
        Ok(BidStack {
            timestamp,
            supply,
            demand,
        })
    }

    pub fn supply(&self) -> &[(f64, f64)] {
        &self.supply
    }

    pub fn demand(&self) -> &[(f64, f64)] {
        &self.demand
    }

    /// Cumulative supply offered at price `p`.
    pub fn supply_at(&self, p: f64) -> f64 {
        let i = self.supply.partition_point(|&(sp, _)| sp <= p);
        if i == 0 {
            0.0
        } else {
            self.supply[i - 1].1
        }
    }

    /// Cumulative demand bid at price `p`.
    pub fn demand_at(&self, p: f64) -> f64 {
        let i = self.demand.partition_point(|&(dp, _)| dp < p);
        self.demand.get(i).map_or(0.0, |d| d.1)
    }

    /// Demand just above `p`.
    fn demand_above(&self, p: f64) -> f64 {
        let i = self.demand.partition_point(|&(dp, _)| dp <= p);
        self.demand.get(i).map_or(0.0, |d| d.1)
    }

    fn max_supply_price(&self) -> f64 {
        self.supply.last().expect("non-empty").0
    }

    fn scale(&self) -> f64 {
        let qs = self.supply.last().map_or(0.0, |s| s.1);
        let qd = self.demand.first().map_or(0.0, |d| d.1);
        qs.max(qd).max(1.0)
    }

    fn breakpoints(&self) -> Vec<f64> {
        let mut ps: Vec<f64> = self
            .supply
            .iter()
            .chain(&self.demand)
            .map(|x| x.0)
            .collect();
        ps.sort_by(f64::total_cmp);
        ps.dedup();
        ps
    }
}

/// Clears the stack with demand raised by `demand_shift` and supply raised by
/// `supply_shift` at every price.
pub fn clear_shifted(
    stack: &BidStack,
    demand_shift: f64,
    supply_shift: f64,
) -> Result<ClearingPoint> {
    let eps = 1e-12 * (stack.scale() + demand_shift.abs() + supply_shift.abs());
    let qs = |p: f64| stack.supply_at(p) + supply_shift;
    let qd = |p: f64| stack.demand_at(p) + demand_shift;
    let qd_above = |p: f64| stack.demand_above(p) + demand_shift;

    // Below every breakpoint supply is only the shift and demand is at its maximum.
    let below = supply_shift - (stack.demand[0].1 + demand_shift);
    if below >= -eps {
        return Err(Error::NoCrossing);
    }

    let ps = stack.breakpoints();
    // Excess at each breakpoint and just to its right.
    let excess = |c: f64| (qs(c) - qd(c), qs(c) - qd_above(c));

    let mut start = None;
    for (i, &c) in ps.iter().enumerate() {
        let (at, right) = excess(c);
        if at >= -eps {
            start = Some((i, c, at.abs() <= eps, true));
            break;
        }
        if right >= -eps {
            start = Some((i, c, right.abs() <= eps, false));
            break;
        }
    }
    let Some((i0, p_lo, flat, attained)) = start else {
        return Err(Error::NoCrossing);
    };
    if p_lo > stack.max_supply_price() {
        return Err(Error::NoCrossing);
    }

    let mut p_star = p_lo;
    if flat {
        // Excess is zero on an interval starting at p_lo; find where it turns positive.
        let mut p_hi = None;
        if attained && excess(p_lo).1 > eps {
            p_hi = Some(p_lo);
        } else {
            for &c in &ps[i0 + 1..] {
                let (at, right) = excess(c);
                if at > eps || right > eps {
                    p_hi = Some(c);
                    break;
                }
            }
        }
        let p_hi = p_hi
            .unwrap_or(stack.max_supply_price())
            .min(stack.max_supply_price());
        p_star = 0.5 * (p_lo + p_hi);
    }
    let q_star = qs(p_star).min(qd(p_star));
    if q_star <= eps {
        return Err(Error::NoCrossing);
    }
    Ok(ClearingPoint { p_star, q_star })
}

pub fn clear(stack: &BidStack) -> Result<ClearingPoint> {
    clear_shifted(stack, 0.0, 0.0)
}

/// Re-clears after an outward demand shift of `delta_q`; returns `(p_plus, p_plus - p_star)`.
pub fn buy_impact(stack: &BidStack, delta_q: f64) -> Result<(f64, f64)> {
    check_shock(delta_q)?;
    let base = clear(stack)?;
    let shocked = clear_shifted(stack, delta_q, 0.0)?;
    Ok((shocked.p_star, shocked.p_star - base.p_star))
}

/// Re-clears after an outward supply shift of `delta_q`; returns `(p_minus, p_minus - p_star)`.
pub fn sell_impact(stack: &BidStack, delta_q: f64) -> Result<(f64, f64)> {
    check_shock(delta_q)?;
    let base = clear(stack)?;
    let shocked = clear_shifted(stack, 0.0, delta_q)?;
    Ok((shocked.p_star, shocked.p_star - base.p_star))
}

fn check_shock(delta_q: f64) -> Result<()> {
    if delta_q.is_finite() && delta_q >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidStack(format!(
            "shock {delta_q} must be finite and non-negative"
        )))
    }
}

/// Stacks keyed by hour-start instant (unix seconds).
pub type StackSet = BTreeMap<i64, BidStack>;

/// Reads `timestamp, side, price, cumulative_quantity` rows; one file may hold many hours.
pub fn read_stacks<R: Read>(reader: R, path: &Path) -> Result<StackSet> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let (ct, cs, cp, cq) = (
        col("timestamp")?,
        col("side")?,
        col("price")?,
        col("cumulative_quantity")?,
    );
    type Curves = (Vec<(f64, f64)>, Vec<(f64, f64)>);
    let mut grouped: BTreeMap<i64, (DateTime<FixedOffset>, Curves)> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let malformed = |message: String| Error::MalformedFile {
            path: path.to_path_buf(),
            row,
            message,
        };
        let rec = rec.map_err(|e| malformed(e.to_string()))?;
        let ts = crate::panel::parse_ts(&rec[ct]).map_err(malformed)?;
        let num = |k: usize| {
            rec[k]
                .parse::<f64>()
                .map_err(|_| malformed(format!("`{}` is not a number", &rec[k])))
        };
        let point = (num(cp)?, num(cq)?);
        let entry = grouped
            .entry(ts.timestamp())
            .or_insert_with(|| (ts, (Vec::new(), Vec::new())));
        match &rec[cs] {
            "supply" => entry.1 .0.push(point),
            "demand" => entry.1 .1.push(point),
            other => return Err(malformed(format!("side `{other}` is not supply/demand"))),
        }
    }
    grouped
        .into_iter()
        .map(|(k, (ts, (s, d)))| BidStack::new(ts, s, d).map(|b| (k, b)))
        .collect()
}

pub fn load_stacks(path: &Path) -> Result<StackSet> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("opening stacks {}", path.display()), e))?;
    read_stacks(f, path)
}

pub fn write_stacks<W: Write>(stacks: &StackSet, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["timestamp", "side", "price", "cumulative_quantity"])?;
    for s in stacks.values() {
        let ts = crate::panel::format_ts(&s.timestamp);
        for (side, pts) in [("supply", &s.supply), ("demand", &s.demand)] {
            for (p, q) in pts.iter() {
                w.write_record([ts.as_str(), side, &p.to_string(), &q.to_string()])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("writing stacks", e))?;
    Ok(())
}

/// Which hours feed the energy-impact average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Hours with the largest |DART| per bucket.
    pub top_n: usize,
    /// Zone whose DART ranks the hours.
    pub zone: String,
    /// Calibration window; all panel dates when `None`.
    pub window: Option<DateRange>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BucketCoverage {
    pub selected: usize,
    pub used: usize,
    pub missing_stack: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyCoeffs {
    #[serde(with = "bucket_keys")]
    pub k_e_plus: BTreeMap<Bucket, f64>,
    #[serde(with = "bucket_keys")]
    pub k_e_minus: BTreeMap<Bucket, f64>,
    #[serde(with = "bucket_keys")]
    pub coverage: BTreeMap<Bucket, BucketCoverage>,
}

/// Averages one-sided finite-difference price responses over the top-N |DART|
/// hours of each (season, band) bucket. Buckets with no hours in the window are
/// omitted; a bucket whose selected hours all lack a usable stack is an error.
pub fn estimate_energy_coeffs(
    stacks: &StackSet,
    panel: &Panel,
    calendar: &MarketCalendar,
    selection: &Selection,
    delta_q: f64,
) -> Result<EnergyCoeffs> {
    if !(delta_q > 0.0 && delta_q.is_finite()) {
        return Err(Error::Config(vec![format!(
            "delta_q {delta_q} must be positive"
        )]));
    }
    let recs = panel.zone_records(&selection.zone);
    if recs.is_empty() {
        return Err(Error::UnknownZone(selection.zone.clone()));
    }
    let mut by_bucket: BTreeMap<Bucket, Vec<(f64, i64)>> = BTreeMap::new();
    for r in recs {
        if selection.window.is_none_or(|w| w.contains(r.local_date())) {
            by_bucket
                .entry(calendar.bucket_of(&r.timestamp))
                .or_default()
                .push((r.dart.abs(), r.timestamp.timestamp()));
        }
    }

    let mut out = EnergyCoeffs {
        k_e_plus: BTreeMap::new(),
        k_e_minus: BTreeMap::new(),
        coverage: BTreeMap::new(),
    };
    for (bucket, mut hours) in by_bucket {
        hours.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        hours.truncate(selection.top_n);
        let mut cov = BucketCoverage {
            selected: hours.len(),
            ..Default::default()
        };
        let (mut up, mut down) = (0.0, 0.0);
        for (_, t) in &hours {
            let Some(stack) = stacks.get(t) else {
                cov.missing_stack += 1;
                continue;
            };
            match (buy_impact(stack, delta_q), sell_impact(stack, delta_q)) {
                (Ok((_, dp_up)), Ok((_, dp_down))) => {
                    up += dp_up;
                    down += -dp_down;
                    cov.used += 1;
                }
                _ => cov.failed += 1,
            }
        }
        if cov.used == 0 {
            return Err(Error::EmptyBucket(bucket.to_string()));
        }
        let n = cov.used as f64;
        out.k_e_plus.insert(bucket, up / n / delta_q);
        out.k_e_minus.insert(bucket, down / n / delta_q);
        out.coverage.insert(bucket, cov);
    }
    Ok(out)
}

/// `k_z = k_ref * L_ref / L_z` for every zone.
pub fn calibrate_kz(
    mean_loads: &BTreeMap<String, f64>,
    reference_zone: &str,
    k_reference: f64,
) -> Result<BTreeMap<String, f64>> {
    for (z, &l) in mean_loads {
        if !(l > 0.0 && l.is_finite()) {
            return Err(Error::ZeroLoad(z.clone()));
        }
    }
    let l_ref = *mean_loads
        .get(reference_zone)
        .ok_or_else(|| Error::MissingReference(reference_zone.to_string()))?;
    Ok(mean_loads
        .iter()
        .map(|(z, &l)| {
            let k = if z == reference_zone {
                k_reference
            } else {
                k_reference * l_ref / l
            };
            (z.clone(), k)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope; `None` with fewer than three points.
    pub slope_se: Option<f64>,
    pub n: usize,
}

impl Regression {
    /// Slope per +1000 MW, the unit used in reports.
    pub fn per_gw(&self) -> f64 {
        1000.0 * self.slope
    }
}

/// OLS with intercept.
pub fn ols(x: &[f64], y: &[f64]) -> Result<Regression> {
    let n = x.len();
    if n < 2 {
        return Err(Error::DegenerateRegressor(format!("{n} observations")));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
    }
    if !(sxx > 0.0) {
        return Err(Error::DegenerateRegressor("regressor is constant".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_se = (n > 2).then(|| {
        let rss: f64 = x
            .iter()
            .zip(y)
            .map(|(a, b)| {
                let e = b - intercept - slope * a;
                e * e
            })
            .sum();
        (rss / (nf - 2.0) / sxx).sqrt()
    });
    Ok(Regression {
        slope,
        intercept,
        slope_se,
        n,
    })
}

/// Regresses `loss - congestion` on zonal forecast load within one bucket.
pub fn load_price_regression(
    panel: &Panel,
    calendar: &MarketCalendar,
    zone: &str,
    bucket: Bucket,
) -> Result<Regression> {
    let recs = panel.zone_records(zone);
    if recs.is_empty() {
        return Err(Error::UnknownZone(zone.to_string()));
    }
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for r in recs
        .iter()
        .filter(|r| calendar.bucket_of(&r.timestamp) == bucket)
    {
        let loss = r
            .loss_component
            .ok_or_else(|| Error::MissingColumn("loss_component".into()))?;
        let cong = r
            .congestion_component
            .ok_or_else(|| Error::MissingColumn("congestion_component".into()))?;
        x.push(r.zonal_load_forecast);
        y.push(loss - cong);
    }
    ols(&x, &y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceInfo {
    pub zone: String,
    pub k_reference: f64,
    pub mean_loads: BTreeMap<String, f64>,
}

/// Calibrated impact coefficients, all per MWh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactParams {
    #[serde(with = "bucket_keys")]
    pub k_e_plus: BTreeMap<Bucket, f64>,
    /// Sell-side slope stored as a positive magnitude.
    #[serde(with = "bucket_keys")]
    pub k_e_minus: BTreeMap<Bucket, f64>,
    pub k_z: BTreeMap<String, f64>,
    pub reference: Option<ReferenceInfo>,
}

impl ImpactParams {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let bad = |v: f64| !(v > 0.0 && v.is_finite());
        for (name, m) in [("k_e_plus", &self.k_e_plus), ("k_e_minus", &self.k_e_minus)] {
            for (b, &v) in m {
                if bad(v) {
                    p.push(format!("{name}[{b}] = {v} must be positive and finite"));
                }
            }
        }
        for (z, &v) in &self.k_z {
            if bad(v) {
                p.push(format!("k_z[{z}] = {v} must be positive and finite"));
            }
        }
        p
    }

    pub fn k_e(&self, bucket: Bucket) -> Result<(f64, f64)> {
        let plus = self.k_e_plus.get(&bucket);
        let minus = self.k_e_minus.get(&bucket);
        match (plus, minus) {
            (Some(&a), Some(&b)) => Ok((a, b)),
            _ => Err(Error::MissingCoefficient(format!(
                "k_E for bucket {bucket}"
            ))),
        }
    }

    pub fn kz(&self, zone: &str) -> Result<f64> {
        self.k_z
            .get(zone)
            .copied()
            .ok_or_else(|| Error::MissingCoefficient(format!("k_z for zone {zone}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("params serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
